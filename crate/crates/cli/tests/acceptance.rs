//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at full budget and takes hours on one core. Select criteria with
//! `ACCEPTANCE=2,4` (default: all). Outputs go under `ACCEPTANCE_OUT` or the
//! cargo test temp dir.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use snpla_cli::commands::{cmd_run, cmd_sbc, cmd_sweep, cmd_timing, RunReport};
use snpla_cli::config::{Experiment, ExperimentConfig, Method};
use snpla_cli::problem::{Problem, Reference};
use snpla_cli::runner::RunResult;
use snpla_core::autodiff::Tensor;
use snpla_core::checks::run_battery;
use snpla_core::flows::ConditionalFlow;
use snpla_core::metrics::{gaussian_kl, mode_coverage, wasserstein1, GaussianSummary};
use snpla_core::models::{two_moons_exact_posterior, Simulator};

type Outcome = (bool, String);

fn out_root() -> PathBuf {
    std::env::var_os("ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn config(e: Experiment, m: Method, n_seeds: usize, dir: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::with_defaults(e, m);
    c.n_seeds = n_seeds;
    c.output_dir = out_root().join(dir);
    c
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn round_metric(r: &RunResult, round: usize, name: &str) -> f64 {
    r.records
        .iter()
        .find(|x| x.round == round)
        .and_then(|x| x.metrics.get(name).copied())
        .unwrap_or(f64::NAN)
}

/// Full-budget runs shared between criteria.
#[derive(Default)]
struct Runs {
    mvg: Option<(ExperimentConfig, RunReport)>,
    tm: Option<(ExperimentConfig, RunReport)>,
}

impl Runs {
    fn mvg(&mut self) -> &(ExperimentConfig, RunReport) {
        self.mvg.get_or_insert_with(|| {
            let cfg = config(Experiment::MvgSummary, Method::Snpla, 5, "mvg_summary");
            let rep = cmd_run(&cfg, None).expect("MV-G run");
            (cfg, rep)
        })
    }

    fn tm(&mut self) -> &(ExperimentConfig, RunReport) {
        self.tm.get_or_insert_with(|| {
            let cfg = config(Experiment::TwoMoons, Method::Snpla, 5, "two_moons_snpla");
            let rep = cmd_run(&cfg, None).expect("two-moons run");
            (cfg, rep)
        })
    }
}

fn ac1() -> Outcome {
    let t = Instant::now();
    let rep = run_battery(0);
    let secs = t.elapsed().as_secs_f64();
    let failures: Vec<String> = rep.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    let ok = failures.is_empty() && secs < 60.0;
    (ok, format!("{} checks, {} failed, {secs:.1} s {failures:?}", rep.checks.len(), failures.len()))
}

fn ac2(runs: &mut Runs) -> Outcome {
    let (_, rep) = runs.mvg();
    let first: Vec<f64> = rep.results.iter().map(|r| round_metric(r, 1, "kl")).collect();
    let last: Vec<f64> = rep.results.iter().map(|r| round_metric(r, 10, "kl")).collect();
    let (m1, m10) = (median(&first), median(&last));
    let ratio = m1 / m10;
    let ok = rep.failures.is_empty() && ratio >= 5.0 && m10 < 1.0;
    (
        ok,
        format!("median KL round 1 {m1:.4}, round 10 {m10:.4}, ratio {ratio:.2} (per seed final {last:.3?})"),
    )
}

/// Step 2 lowers the fixed-noise validation loss within a round.
fn step2_invariant(runs: &mut Runs) -> Outcome {
    let (_, rep) = runs.mvg();
    let (mut better, mut total) = (0, 0);
    for r in &rep.results {
        for rec in &r.records {
            if let Some((first, rest)) = rec.post_val_loss.split_first() {
                total += 1;
                if rest.iter().any(|v| v < first) {
                    better += 1;
                }
            }
        }
    }
    let frac = better as f64 / total.max(1) as f64;
    (frac >= 0.8, format!("{better}/{total} rounds decreased the reverse-KL estimate"))
}

fn flow_draws(flow: &ConditionalFlow, thetas: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mut xs = Vec::with_capacity(thetas.rows() * flow.dim());
    for t in thetas.iter_rows() {
        let (x, _) = flow.sample_values(1, Some(t), rng).expect("flow sample");
        xs.extend_from_slice(x.data());
    }
    Tensor::new(thetas.rows(), flow.dim(), xs).expect("shape")
}

fn sim_draws(sim: &dyn Simulator, thetas: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let rows: Vec<Vec<f64>> = thetas.iter_rows().map(|t| sim.simulate(t, rng)).collect();
    Tensor::from_rows(&rows).expect("shape")
}

fn col_stats(x: &Tensor, j: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let m = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
    let v = x.iter_rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn ac3(runs: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1000;
    // MV-G (ii): per-summary means at analytic-posterior draws
    let (cfg, rep) = runs.mvg();
    let problem = Problem::build(cfg).expect("problem");
    let Reference::Analytic(post) = &problem.reference else { unreachable!() };
    let thetas = post.sample(n, &mut rng).expect("posterior draws");
    let like = rep.results[0].likelihood.as_ref().expect("likelihood");
    let fx = flow_draws(like, &thetas, &mut rng);
    let sx = sim_draws(problem.simulator.as_ref(), &thetas, &mut rng);
    let mut z = Vec::new();
    for j in 0..fx.cols() {
        let (mf, vf) = col_stats(&fx, j);
        let (ms, vs) = col_stats(&sx, j);
        z.push((mf - ms).abs() / (vf / n as f64 + vs / n as f64).sqrt());
    }
    let means_ok = z.iter().all(|v| *v < 3.0);

    // two-moons: W1 against the simulator, relative to simulator noise
    let (cfg, rep) = runs.tm();
    let problem = Problem::build(cfg).expect("problem");
    let thetas = two_moons_exact_posterior(n, cfg.two_moons_radial_first, &mut rng);
    let like = rep.results[0].likelihood.as_ref().expect("likelihood");
    let fx = flow_draws(like, &thetas, &mut rng);
    let sx = sim_draws(problem.simulator.as_ref(), &thetas, &mut rng);
    let sx2 = sim_draws(problem.simulator.as_ref(), &thetas, &mut rng);
    let w_flow = wasserstein1(&fx, &sx).expect("w1");
    let w_sim = wasserstein1(&sx2, &sx).expect("w1");
    let w_ok = w_flow < 2.0 * w_sim;
    (
        means_ok && w_ok,
        format!("MV-G mean z-scores {z:.2?}; two-moons W1 flow {w_flow:.4} vs simulator {w_sim:.4}"),
    )
}

fn covers(samples: &Tensor) -> bool {
    let (p, n) = mode_coverage(samples);
    (0.2..=0.8).contains(&p) && (0.2..=0.8).contains(&n)
}

fn ac4(runs: &mut Runs) -> Outcome {
    let (cfg, rep) = runs.tm();
    let problem = Problem::build(cfg).expect("problem");
    let Reference::Samples(reference) = &problem.reference else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prior = problem.simulator.prior().sample_n(reference.rows(), &mut rng);
    let prior_w1 = wasserstein1(&prior, reference).expect("w1");
    let snpla_cov: Vec<(f64, f64)> = rep.results.iter().map(|r| mode_coverage(r.final_samples().unwrap())).collect();
    let snpla_ok = rep.results.iter().filter(|r| covers(r.final_samples().unwrap())).count();
    let finals: Vec<f64> = rep.results.iter().filter_map(|r| r.final_metric("w1")).collect();
    let factor = prior_w1 / median(&finals);

    let snl_cfg = config(Experiment::TwoMoons, Method::Snl, 5, "two_moons_snl");
    let snl = cmd_run(&snl_cfg, None).expect("SNL run");
    let snl_cov: Vec<(f64, f64)> = snl.results.iter().map(|r| mode_coverage(r.final_samples().unwrap())).collect();
    let snl_ok = snl.results.iter().filter(|r| covers(r.final_samples().unwrap())).count();
    let ok = snpla_ok >= 4 && snl_ok <= 2 && factor >= 3.0 && rep.failures.is_empty() && snl.failures.is_empty();
    (
        ok,
        format!(
            "SNPLA covers both modes in {snpla_ok}/5 {snpla_cov:.2?}; SNL in {snl_ok}/5 {snl_cov:.2?}; \
             prior W1 {prior_w1:.3} / median final W1 {:.3} = {factor:.2} (per seed {finals:.3?})",
            median(&finals)
        ),
    )
}

fn ac5() -> Outcome {
    let cfg = config(Experiment::LotkaVolterra, Method::Snpla, 3, "lotka_volterra");
    let rep = cmd_run(&cfg, None).expect("LV run");
    let rounds = cfg.snpla_or_default().rounds;
    let medians: Vec<f64> = (1..=rounds)
        .map(|r| median(&rep.results.iter().map(|x| round_metric(x, r, "neg_log_pdf")).collect::<Vec<_>>()))
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let in_box = rep
        .results
        .iter()
        .all(|r| r.final_samples().unwrap().data().iter().all(|v| (-5.0..=2.0).contains(v)));

    let problem = Problem::build(&cfg).expect("problem");
    let sim = problem.simulator.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = |x: &[f64]| x.iter().zip(&problem.x_obs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n_pred = 200;
    let post = rep.results[0].final_samples().unwrap();
    let post_d: Vec<f64> = (0..n_pred)
        .map(|_| {
            let i = rng.random_range(0..post.rows());
            dist(&sim.simulate(post.row_slice(i), &mut rng))
        })
        .collect();
    let prior = sim.prior().sample_n(n_pred, &mut rng);
    let prior_d: Vec<f64> = prior.iter_rows().map(|t| dist(&sim.simulate(t, &mut rng))).collect();
    let (mp, mq) = (median(&post_d), median(&prior_d));
    let ok = monotone && in_box && mp < mq && rep.failures.is_empty();
    (
        ok,
        format!(
            "median neg-log-pdf by round {medians:.3?}; samples in box: {in_box}; \
             predictive distance posterior {mp:.3} vs prior {mq:.3}"
        ),
    )
}

fn ac6(runs: &mut Runs) -> Outcome {
    let (cfg, _) = runs.mvg();
    let mut c = cfg.clone();
    c.snl = Some(c.snl_or_default());
    let rep = cmd_timing(&c, 1000, true).expect("timing");
    let ratio = rep.ratio();
    (
        ratio >= 100.0 && rep.snpla_median_sec < 1.0,
        format!(
            "1000 draws: SNPLA {:.4} s, SNL {:.3} s, ratio {ratio:.0}",
            rep.snpla_median_sec, rep.snl_median_sec
        ),
    )
}

fn ac7() -> Outcome {
    let cfg = config(Experiment::MvgSummary, Method::Snpla, 1, "sweep");
    let lambdas: Vec<f64> = (0..8).map(|i| 0.6 + 0.05 * i as f64).map(|l| (l * 100.0).round() / 100.0).collect();
    let rep = cmd_sweep(&cfg, &lambdas, None).expect("sweep");
    let finals: Vec<(f64, f64)> = rep.points.iter().map(|p| (p.lambda, p.final_metric)).collect();
    (rep.all_within(), format!("final KL by lambda {finals:.3?}"))
}

fn ac8() -> Outcome {
    let mut cfg = config(Experiment::MvgSummary, Method::Snpla, 1, "sbc");
    cfg.sbc = Some(Default::default());
    let res = cmd_sbc(&cfg, 100, 20).expect("sbc");
    let mut ok = true;
    let mut parts = Vec::new();
    for j in 0..res.histograms.len() {
        let inside = res.bins_in_band(j);
        ok &= inside >= 19 && res.histograms[j].len() == 21 && res.p_values[j] > 0.01;
        parts.push(format!("param {}: {inside}/21 in band, p {:.3}", j + 1, res.p_values[j]));
    }
    (ok, parts.join("; "))
}

/// Exact W1 by trying every permutation (Heap's algorithm).
fn brute_w1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let cost = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| (0..n).map(|i| cost(i, p[i])).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

fn random_pd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

fn ac9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_w1 = 0.0f64;
    let instances = 300;
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=3);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
        };
        let (a, b) = (pts(&mut rng), pts(&mut rng));
        let fast = wasserstein1(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap()).unwrap();
        worst_w1 = worst_w1.max((fast - brute_w1(&a, &b)).abs());
    }
    let w1_ok = worst_w1 < 1e-9;

    let n_mc = 1_000_000;
    let mut worst_kl = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let mp = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mq = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let (sp, sq) = (random_pd(d, &mut rng), random_pd(d, &mut rng));
        let exact = gaussian_kl(
            &GaussianSummary::new(mp.clone(), sp.clone(), 0),
            &GaussianSummary::new(mq.clone(), sq.clone(), 0),
        )
        .unwrap();
        let lp = sp.clone().cholesky().unwrap().l();
        let lq_chol = sq.clone().cholesky().unwrap();
        let lq = lq_chol.l();
        // log p(x) - log q(x) with x = mp + Lp z
        let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let c = 0.5 * (logdet(&lq) - logdet(&lp));
        let mut acc = 0.0;
        for _ in 0..n_mc {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &mp + &lp * &z;
            let u = lq.solve_lower_triangular(&(&x - &mq)).unwrap();
            acc += c - 0.5 * z.norm_squared() + 0.5 * u.norm_squared();
        }
        let mc = acc / n_mc as f64;
        worst_kl = worst_kl.max((mc - exact).abs() / exact);
    }
    let kl_ok = worst_kl < 0.01;
    (
        w1_ok && kl_ok,
        format!("W1 vs brute force: max |diff| {worst_w1:.2e} over {instances}; KL vs MC: max rel err {worst_kl:.4}"),
    )
}

fn main() {
    let selected: Vec<String> = std::env::var("ACCEPTANCE")
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
        .unwrap_or_else(|_| (1..=9).map(|i| i.to_string()).collect());
    let want = |k: &str| selected.iter().any(|s| s == k);
    let mut runs = Runs::default();
    let mut results: BTreeMap<String, Outcome> = BTreeMap::new();
    let mut run = |key: &str, f: &mut dyn FnMut(&mut Runs) -> Outcome, runs: &mut Runs| {
        let t = Instant::now();
        let (ok, detail) = f(runs);
        let line = format!(
            "AC{key} {} ({:.0} s) {detail}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.insert(key.to_string(), (ok, detail));
    };
    if want("1") {
        run("1", &mut |_| ac1(), &mut runs);
    }
    if want("9") {
        run("9", &mut |_| ac9(), &mut runs);
    }
    if want("8") {
        run("8", &mut |_| ac8(), &mut runs);
    }
    if want("2") {
        run("2", &mut ac2, &mut runs);
        run("2-step2", &mut step2_invariant, &mut runs);
    }
    if want("6") {
        run("6", &mut ac6, &mut runs);
    }
    if want("7") {
        run("7", &mut |_| ac7(), &mut runs);
    }
    if want("4") {
        run("4", &mut ac4, &mut runs);
    }
    if want("3") {
        run("3", &mut ac3, &mut runs);
    }
    if want("5") {
        run("5", &mut |_| ac5(), &mut runs);
    }
    let failed: Vec<&String> = results.iter().filter(|(_, (ok, _))| !ok).map(|(k, _)| k).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
