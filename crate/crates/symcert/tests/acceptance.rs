//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits with
//! a failure status when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symcert::certify::{self, Route, SampleInputs};
use symcert::experiments::{coverage_with, equality_pipeline, CoverageConfig};
use symcert::graph::build_graph;
use symcert::kernel::{gram_bundle, template_matrix, EqualityPatternKernel};
use symcert::kl;
use symcert::klr;
use symcert::linalg::{self, Mat, Vector};
use symcert::prompting;
use symcert::task::{sample_dataset, sample_test, Alphabet, SubstitutionScheme, Template, TemplateFamily};
use symcert::transformer::{self, Activation, AttnConfig, FiniteWidth, SeqGrams, WidthConfig};
use symcert::worked_cases;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Mat {
    let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / rank as f64
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

// 1
fn worked_cases_routes() -> Outcome {
    let start = Instant::now();
    let reports = worked_cases::run_all().expect("worked cases run");
    let secs = start.elapsed().as_secs_f64();
    let route_hits = reports.iter().filter(|r| r.route_matches()).count();
    let rho_hits = reports.iter().filter(|r| r.b_rho_matches()).count();
    let misses: Vec<String> = reports
        .iter()
        .filter(|r| !r.route_matches())
        .map(|r| {
            format!(
                "{} got {} expected {}",
                r.name,
                r.stable_route.map_or("none", Route::label),
                r.expected_route.label()
            )
        })
        .collect();
    outcome(
        route_hits == 8 && rho_hits == 8 && secs < 60.0,
        format!(
            "routes {route_hits}/8, B_rho {rho_hits}/8, {secs:.1}s; mismatches: [{}]",
            misses.join(", ")
        ),
    )
}

fn literal_family() -> TemplateFamily {
    TemplateFamily::new(
        vec![
            Template::parse("#900ab").unwrap(),
            Template::parse("a#901b").unwrap(),
            Template::parse("aab").unwrap(),
        ],
        vec![1, -1, 1],
        vec![0.4, 0.3, 0.3],
    )
    .unwrap()
}

// 2
fn support_lemma() -> Outcome {
    let kernel = EqualityPatternKernel::default();
    let mut violations = 0usize;
    let mut fresh_pairs = 0usize;
    let mut fresh_tests = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..200u64 {
        let (fam, scheme) = if seed % 2 == 0 {
            let m = 6 + (seed as usize % 10);
            (
                TemplateFamily::equality(),
                SubstitutionScheme::uniform(Alphabet::ranges(0, m, 0, 6)),
            )
        } else {
            // literals sit inside the training alphabet so literal hits occur
            let mut alpha = Alphabet::ranges(0, 8, 0, 6);
            alpha.train.extend([900, 901]);
            (literal_family(), SubstitutionScheme::uniform(alpha))
        };
        let n = 16 + (seed as usize * 37) % 241;
        let ds = sample_dataset(&fam, &scheme, n, seed).unwrap();
        let a = rng.random_range(0..fam.r());
        let test = sample_test(&fam, &scheme, a, &mut rng).unwrap();
        let tmat = template_matrix(&kernel, &fam, &(5000..5010).collect::<Vec<_>>()).unwrap();
        let bundle = gram_bundle(&kernel, &ds, &test, &fam, &tmat).unwrap();
        let graph = build_graph(&ds, &test, &fam);
        for i in 0..n {
            for j in 0..n {
                if i != j && !graph.edge(i, j) {
                    fresh_pairs += 1;
                    violations += usize::from(bundle.delta[(i, j)] != 0.0);
                }
            }
            if !graph.test_edges[i] {
                fresh_tests += 1;
                violations += usize::from(bundle.zeta[i] != 0.0);
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {fresh_pairs} fresh pairs and {fresh_tests} fresh test edges"),
    )
}

// 3
fn dual_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut kkt, mut blk, mut cgap) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..100 {
        let n = 10 + (t * 19) % 191;
        let rank = 1 + rng.random_range(0..n.min(30));
        let g = random_psd(&mut rng, n, rank);
        let y = random_labels(&mut rng, n);
        let lambda = 10f64.powf(rng.random_range(-2.0..0.0));
        let sol = klr::solve_dual(&g, &y, lambda).unwrap();
        kkt = kkt.max(linalg::sup_norm(&klr::dual_gradient(&g, &y, lambda, &sol.c)));
        let f = klr::training_scores(&g, &sol.c, &y, lambda);
        for i in 0..n {
            cgap = cgap.max((sol.c[i] - 1.0 / (1.0 + (y[i] * f[i]).exp())).abs());
        }
    }
    for t in 0..100 {
        let r = 2 + t % 4;
        let nmat = random_psd(&mut rng, r, r) + Mat::identity(r, r) * 0.05;
        let y_r: Vec<f64> = (0..r).map(|b| if b % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n = 8 + rng.random_range(0..60);
        let mut colors: Vec<usize> = (0..n).map(|i| i % r).collect();
        colors.sort_unstable();
        let lambda = 10f64.powf(rng.random_range(-2.0..0.0));
        let rep = klr::block_reduction_check(&nmat, &colors, lambda, &y_r, t % r).unwrap();
        blk = blk.max(rep.gap);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        kkt <= 1e-10 && blk <= 1e-8 && cgap <= 1e-8 && secs < 120.0,
        format!("max KKT {kkt:.2e}, block gap {blk:.2e}, c-identity gap {cgap:.2e}, {secs:.1}s"),
    )
}

// 4
fn deterministic_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut stab_viol, mut curv_viol, mut curv_checked) = (0, 0, 0);
    let mut id_gap = 0.0f64;
    for t in 0..100 {
        let r = 2 + t % 3;
        let nmat = random_psd(&mut rng, r, r) + Mat::identity(r, r) * 0.1;
        let n = 12 + rng.random_range(0..40);
        let colors: Vec<usize> = (0..n).map(|i| i % r).collect();
        let y_r: Vec<f64> = (0..r).map(|b| if b % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = Vector::from_iterator(n, colors.iter().map(|&c| y_r[c]));
        let m = linalg::expand_blocks(&nmat, &colors);
        let scale = 10f64.powf(rng.random_range(-3.0..-0.5));
        let g = &m + random_psd(&mut rng, n, 3) * scale;
        let a = t % r;
        let mv = Vector::from_iterator(n, colors.iter().map(|&c| nmat[(a, c)]));
        let k = &mv + Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * scale);
        let lambda = 10f64.powf(rng.random_range(-1.5..0.0));
        let s_g = klr::primal_score(&klr::solve_dual(&g, &y, lambda).unwrap().c, &y, &k, lambda).unwrap();
        let s_m = klr::primal_score(&klr::solve_dual(&m, &y, lambda).unwrap().c, &y, &mv, lambda).unwrap();
        let diff = (s_g - s_m).abs();
        let kappa_sq = k.amax().max(mv.amax());
        if diff > klr::stability_bound(&g, &m, &k, &mv, lambda, kappa_sq) * (1.0 + 1e-9) {
            stab_viol += 1;
        }
        let curv = klr::curvature_error(&g, &m, &k, &mv, lambda, &y).unwrap();
        if curv.gamma < 1.0 {
            curv_checked += 1;
            if diff > curv.bound * (1.0 + 1e-9) {
                curv_viol += 1;
            }
        }
        let delta = &g - &m;
        id_gap = id_gap.max(klr::template_identities(&nmat, &colors, &y_r, &delta, lambda, a).unwrap().max_gap());
    }
    outcome(
        stab_viol == 0 && curv_viol == 0 && id_gap <= 1e-8,
        format!("stability violations {stab_viol}/100, curvature violations {curv_viol}/{curv_checked}, identity gap {id_gap:.2e}"),
    )
}

// 5 and 6
fn coverage() -> (Outcome, Outcome) {
    let start = Instant::now();
    let cfg = CoverageConfig::default();
    let p = equality_pipeline(cfg.m, cfg.m_test).unwrap();
    let s = coverage_with(&p, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let v_expected = ((4.0 + 8.0 + 1.0) / 0.1f64).ln();
    let th1 = 1.0 - 2.0 * (-96.0 * 0.5 / 8.0f64).exp() - 0.1 - 3.0 * s.covered.stderr;
    let th2 = 1.0 - 0.1 - 3.0 * s.dominated.stderr;
    (
        outcome(
            s.covered.rate >= th1,
            format!(
                "covered {:.4} >= {th1:.4} over {} trials, {secs:.1}s",
                s.covered.rate, s.covered.trials
            ),
        ),
        outcome(
            s.dominated.rate >= th2 && s.identity_violations == 0 && (s.v - v_expected).abs() < 1e-12,
            format!(
                "dominated {:.4} >= {th2:.4}, v = {:.4}, identity violations {}",
                s.dominated.rate, s.v, s.identity_violations
            ),
        ),
    )
}

// 7
fn kl_machinery() -> Outcome {
    let (mut gap, mut relax_viol) = (0.0f64, 0);
    for i in 0..10 {
        for j in 0..10 {
            for k in 0..10 {
                let n_eff = 1.0 + 40.0 * i as f64;
                let q = 0.001 + 0.11 * j as f64;
                let u = 0.05 + 1.5 * k as f64;
                let exact = kl::kl_inverse(n_eff, q, u);
                gap = gap.max((exact - kl::kl_inverse_scan(n_eff, q, u, 1000, 6)).abs());
                relax_viol += usize::from(kl::bernstein_relax(n_eff, q, u) < exact - 1e-12);
            }
        }
    }
    // tail validity: P(q_hat >= U(u)) <= exp(-u) for binomial means
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tail_viol = 0;
    let trials = 20_000;
    let mut cases = 0;
    for &(n, q) in &[(50usize, 0.05f64), (200, 0.1), (30, 0.3), (100, 0.02)] {
        for &u in &[1.0f64, 2.0, 3.0] {
            cases += 1;
            let bound = kl::kl_inverse(n as f64, q, u);
            let hits = (0..trials)
                .filter(|_| {
                    let s = (0..n).filter(|_| rng.random_bool(q)).count();
                    s as f64 / n as f64 >= bound
                })
                .count();
            let rate = hits as f64 / trials as f64;
            let target = (-u).exp();
            let sigma = (target * (1.0 - target) / trials as f64).sqrt();
            tail_viol += usize::from(rate > target + 3.0 * sigma);
        }
    }
    outcome(
        gap <= 1e-10 && relax_viol == 0 && tail_viol == 0,
        format!("bisection vs scan {gap:.2e} on 1000 points, relaxation violations {relax_viol}, tail violations {tail_viol}/{cases}"),
    )
}

// 8
fn transformer_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut closed_gap = 0.0f64;
    for _ in 0..20 {
        let k = 2 + rng.random_range(0..4);
        let x = DMatrix::from_fn(k, 5, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(k, 5, |_, _| rng.random_range(-1.0..1.0));
        let gamma = rng.random_range(0.0..1.0);
        let cfg = AttnConfig {
            beta: 0.0,
            gamma,
            activation: Activation::Identity,
        };
        let g = SeqGrams::from_embeddings(&x, &y).unwrap();
        let got = transformer::attn_kernel_limit(&g, &cfg, 0, 0).unwrap().mean;
        // uniform attention averages every row pair
        let mut want = 0.0;
        for i in 0..k {
            for j in 0..k {
                want += x.row(i).dot(&y.row(j)) + if i == j { gamma * gamma } else { 0.0 };
            }
        }
        want /= (k * k) as f64;
        closed_gap = closed_gap.max((got - want).abs());
    }
    let mut collapse_gap = 0.0f64;
    for s in 0..10u64 {
        let cfg = AttnConfig {
            beta: 1.0,
            gamma: 0.5,
            activation: Activation::Identity,
        };
        let g = SeqGrams::from_tokens(&[1, 2, 0], &[1, 1, 0]).unwrap();
        let lim = transformer::trans_kernel_limit(&g, &cfg, 20_000, transformer::DEFAULT_QUADRATURE, s).unwrap();
        collapse_gap = collapse_gap.max((lim.value - lim.k_xy.mean).abs());
    }
    let cfg = AttnConfig::default();
    let inputs: Vec<Mat> = [[1, 1], [1, 2], [3, 3], [3, 4]]
        .iter()
        .map(|s| transformer::one_hot(&[s[0], s[1], 0], 8).unwrap())
        .collect();
    let limit = transformer::limit_gram(&inputs, &cfg, 400_000, transformer::DEFAULT_QUADRATURE, 11).unwrap();
    let median_err = |d: usize, trial: u64| {
        let fw = FiniteWidth {
            cfg,
            widths: WidthConfig::square_root(d),
            seed: 1000 + trial * 7919 + d as u64,
        };
        let g = fw.gram(&inputs).unwrap();
        let mut errs: Vec<f64> = (&g - &limit).iter().map(|e| e.abs()).collect();
        errs.sort_by(f64::total_cmp);
        (errs[errs.len() / 2 - 1] + errs[errs.len() / 2]) / 2.0
    };
    let wins = (0..20).filter(|&t| median_err(1024, t) < median_err(64, t)).count();
    outcome(
        closed_gap <= 1e-12 && collapse_gap <= 1e-6 && wins >= 16,
        format!("uniform-attention gap {closed_gap:.2e}, identity collapse gap {collapse_gap:.2e}, width 1024 beats 64 in {wins}/20"),
    )
}

// 9
fn prompting_derivative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let r = 2 + rng.random_range(0..4);
        let n = random_psd(&mut rng, r, r) + Mat::identity(r, r) * 0.3;
        let hr = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let h = (&hr + hr.transpose()) * 0.5;
        let q: Vec<f64> = vec![1.0 / r as f64; r];
        let y: Vec<f64> = (0..r).map(|b| if b % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let lambda = rng.random_range(0.05..1.0);
        let rep = prompting::fd_check(&n, &h, &q, lambda, &y, &[1e-3, 1e-4]).unwrap();
        ratios.push(rep.ratios[0]);
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        ratios.iter().all(|&x| (x - 100.0).abs() <= 20.0),
        format!("error ratios between eta 1e-3 and 1e-4 lie in [{lo:.2}, {hi:.2}] on 20 instances"),
    )
}

// 10
fn ledger_cancellation() -> Outcome {
    let ledger = worked_cases::cancellation_ledger();
    let sums_zero = ledger.row_sums.iter().chain(&ledger.col_sums).all(|&s| s == 0.0);
    let lambdas = worked_cases::lambda_grid();
    let wins = lambdas
        .iter()
        .filter(|&&l| {
            let rep = worked_cases::cancellation_certificate(l).unwrap();
            rep.budgets.anova < rep.budgets.bd
        })
        .count();
    outcome(
        sums_zero && ledger.density == 0.5 && wins == lambdas.len(),
        format!(
            "row/column sums zero: {sums_zero}, density {}/16, ANOVA < BD at {wins}/{} ridge values",
            ledger.support.sum(),
            lambdas.len()
        ),
    )
}

// 11
fn multiclass_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = equality_pipeline(12, 10).unwrap();
    let classes: Vec<usize> = p.y_r.iter().map(|&s| usize::from(s < 0.0)).collect();
    let mut gap = 0.0f64;
    for t in 0..20u64 {
        let n = 20 + rng.random_range(0..60);
        let ds = sample_dataset(&p.fam, &p.scheme, n, 100 + t).unwrap();
        let a = (t % 2) as usize;
        let test = sample_test(&p.fam, &p.scheme, a, &mut rng).unwrap();
        let bundle = gram_bundle(p.kernel.as_ref(), &ds, &test, &p.fam, &p.tmat).unwrap();
        let graph = build_graph(&ds, &test, &p.fam);
        let sizes = ds.block_sizes();
        let colors = ds.colors();
        let sample = SampleInputs {
            khat: &bundle.khat,
            colors: &colors,
            sizes: &sizes,
            test_template: a,
            d2: graph.d2(),
        };
        let lambda = rng.random_range(0.02..0.5);
        let model = &p.models[a];
        let multi = certify::certify_multiclass(model, &sample, &classes, 2, &p.fam.masses, lambda, 0.1).unwrap();
        let binary = certify::certify(model, &sample, &p.y_r, &p.fam.masses, lambda / 2.0, 0.1).unwrap();
        let contrast = &multi.contrasts[0].1;
        // every budget, not only the selected one, must agree
        for route in Route::ALL {
            let (x, y) = (contrast.budgets.get(route), binary.budgets.get(route));
            if x.is_finite() || y.is_finite() {
                gap = gap.max((x - y).abs());
            }
        }
        gap = gap.max((contrast.ideal_score - p.y_r[a] * binary.ideal_score).abs());
    }
    let mut resid = 0.0f64;
    for _ in 0..20 {
        let n = 10 + rng.random_range(0..50);
        let l = 3;
        let g = random_psd(&mut rng, n, 5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
        let lambda = rng.random_range(0.05..1.0);
        resid = resid.max(klr::solve_softmax_dual(&g, &labels, l, lambda).unwrap().grad_norm);
        let r = 3;
        let nmat = random_psd(&mut rng, r, r) + Mat::identity(r, r) * 0.1;
        let ideal = klr::solve_softmax_ideal(&nmat, &[0.3, 0.3, 0.4], lambda, &[0, 1, 2], l).unwrap();
        resid = resid.max(ideal.stationarity);
    }
    outcome(
        gap <= 1e-9 && resid <= 1e-8,
        format!("contrast vs binary gap {gap:.2e} on 20 instances, max stationarity residual {resid:.2e}"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "worked-case routes", worked_cases_routes()),
        (2, "support-lemma exactness", support_lemma()),
        (3, "dual correctness", dual_correctness()),
        (4, "deterministic bounds", deterministic_bounds()),
    ];
    let (c5, c6) = coverage();
    results.push((5, "certificate coverage", c5));
    results.push((6, "edge-wedge domination", c6));
    results.push((7, "KL machinery", kl_machinery()));
    results.push((8, "transformer kernel", transformer_kernel()));
    results.push((9, "prompting derivative", prompting_derivative()));
    results.push((10, "ledger cancellation", ledger_cancellation()));
    results.push((11, "multiclass reduction", multiclass_reduction()));
    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {id:>2} [{tag}] {name}: {}", o.detail);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
