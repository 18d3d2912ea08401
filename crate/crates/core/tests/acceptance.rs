//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stdout (bypassing the capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use mclt::covariance::{project_structure, structured_criterion, ScatterSet};
use mclt::scalar::logistic;
use mclt::selection::{adjusted_rand_index_exact, score_fit};
use mclt::simulate::{
    generate, reference_block_model, reference_two_group_model, replicate_study, Alignment,
    EvalReport, SimulationSpec,
};
use mclt::{
    count_free_parameters, fit, fit_block, loglik_quadrature, BinaryDataset, BlockOptions,
    CovarianceStructure, FitOptions, Model, ModelConfig, StoppingRule,
};
use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion}: {verdict} ({detail})");
}

fn random_model(rng: &mut ChaCha8Rng, g: usize, d: usize, m: usize, scale: f64) -> Model {
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let w = DMatrix::from_fn(m, d, |_, _| scale * normal(rng));
    let raw: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let mu = (0..g).map(|_| DVector::from_fn(d, |_, _| 1.5 * normal(rng))).collect();
    let sigma = (0..g)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| 0.6 * normal(rng));
            &a * a.transpose() + DMatrix::identity(d, d) * 0.3
        })
        .collect();
    Model {
        w,
        eta: DVector::from_iterator(g, raw.iter().map(|r| r / total)),
        mu,
        sigma,
        structure: CovarianceStructure::VVV,
        block: None,
    }
}

fn sample(model: &Model, n: usize, seed: u64) -> BinaryDataset {
    generate(&SimulationSpec::flat(model.clone(), n, seed)).unwrap().data
}

#[test]
fn criterion_01_parameter_counts() {
    let table = [((2, 50), (102, 107)), ((5, 50), (111, 125)), ((2, 100), (202, 207)), ((5, 100), (211, 225))];
    let mut mismatches = Vec::new();
    for ((g, m), expected) in table {
        let counts: Vec<usize> = CovarianceStructure::ALL
            .iter()
            .map(|&s| count_free_parameters(&ModelConfig::new(g, 2, s), m, 0))
            .collect();
        let got = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        if got != expected {
            mismatches.push(format!("G={g} M={m}: {got:?} != {expected:?}"));
        }
    }
    report(1, mismatches.is_empty(), &format!("{} of 4 table rows match", 4 - mismatches.len()));
    assert!(mismatches.is_empty(), "{mismatches:?}");
}

const STUDY_REPLICATES: usize = 20;
const STUDY_DATA_SEED: u64 = 1000;

fn study(n: usize) -> EvalReport {
    let spec = SimulationSpec::flat(reference_two_group_model(), n, STUDY_DATA_SEED);
    let options = FitOptions {
        starts: 10,
        ..FitOptions::default()
    };
    replicate_study(&spec, STUDY_REPLICATES, &options, Alignment::Orthogonal).unwrap()
}

fn study_500() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| study(500))
}

#[test]
fn criterion_02_simulation_ari() {
    let r = study_500();
    let pass = r.failures == 0 && (0.45..=0.75).contains(&r.ari_mean);
    report(
        2,
        pass,
        &format!("mean ARI {:.4}, SE {:.4}, {} replicates, {} failures", r.ari_mean, r.ari_se, r.replicates, r.failures),
    );
    assert!(pass);
}

#[test]
fn criterion_03_mse_decreases_with_n() {
    let small = study(100);
    let large = study_500();
    let decreasing = small
        .mse_mu
        .iter()
        .zip(large.mse_mu.iter())
        .filter(|(s, l)| l < s)
        .count();
    let pass = decreasing >= 3;
    report(
        3,
        pass,
        &format!(
            "{decreasing} of 4 mean coordinates; n=100 {:?}, n=500 {:?}",
            small.mse_mu.as_slice(),
            large.mse_mu.as_slice()
        ),
    );
    assert!(pass);
}

fn random_instance(rng: &mut ChaCha8Rng, seed: u64) -> (BinaryDataset, ModelConfig) {
    let n = rng.random_range(20..=200);
    let m = rng.random_range(3..=10);
    let g = rng.random_range(1..=3);
    let d = rng.random_range(1..=2);
    let truth = random_model(rng, g, d, m, 1.2);
    let s = CovarianceStructure::ALL[rng.random_range(0..14)];
    (sample(&truth, n, seed), ModelConfig::new(g, d, s))
}

#[test]
fn criterion_04_bound_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut violations, mut worst, mut errors) = (0usize, 0.0f64, 0usize);
    for inst in 0..50u64 {
        let (data, config) = random_instance(&mut rng, 4000 + inst);
        let options = FitOptions {
            starts: 1,
            seed: inst,
            max_iterations: 300,
            parallel: false,
            ..FitOptions::default()
        };
        match fit(&data, &config, &options) {
            Ok(f) => {
                for w in f.diagnostics.loglik_trace.windows(2) {
                    if w[1] < w[0] - 1e-8 {
                        violations += 1;
                        worst = worst.max(w[0] - w[1]);
                    }
                }
            }
            Err(_) => errors += 1,
        }
    }
    let pass = violations == 0 && errors == 0;
    report(4, pass, &format!("{violations} decreasing steps (worst {worst:.3e}), {errors} failed fits, 50 instances"));
    assert!(pass);
}

#[test]
fn criterion_05_bound_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0;
    let mut worst = f64::NEG_INFINITY;
    for inst in 0..20u64 {
        let (data, config) = random_instance(&mut rng, 5000 + inst);
        let options = FitOptions {
            starts: 2,
            seed: inst,
            parallel: false,
            ..FitOptions::default()
        };
        let f = fit(&data, &config, &options).unwrap();
        let lq = loglik_quadrature(&f.model, &data, 20).unwrap();
        let excess = (f.loglik_variational - lq) / data.n_rows() as f64;
        worst = worst.max(excess);
        if excess <= 1e-3 {
            ok += 1;
        }
    }
    report(5, ok == 20, &format!("{ok}/20 instances, largest (var - quad)/N = {worst:.3e}"));
    assert_eq!(ok, 20);
}

/// Monte Carlo log-likelihood with its standard error, independent draws
/// per row.
fn monte_carlo_loglik(model: &Model, data: &BinaryDataset, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let d = model.latent_dim();
    let roots: Vec<DMatrix<f64>> = model.sigma.iter().map(|s| s.clone().cholesky().unwrap().l()).collect();
    let (mut total, mut var) = (0.0, 0.0);
    for n in 0..data.n_rows() {
        let x = data.row(n);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let u: f64 = rng.random();
            let mut g = 0;
            let mut acc = model.eta[0];
            while u > acc && g + 1 < model.groups() {
                g += 1;
                acc += model.eta[g];
            }
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &model.mu[g] + &roots[g] * z;
            let eta = &model.w * y;
            let p: f64 = x
                .iter()
                .zip(eta.iter())
                .map(|(&xm, &a)| if xm == 1 { logistic(a) } else { logistic(-a) })
                .product();
            sum += p;
            sum_sq += p * p;
        }
        let mean = sum / draws as f64;
        let sd = (sum_sq / draws as f64 - mean * mean).max(0.0).sqrt();
        total += mean.ln();
        var += (sd / mean).powi(2) / draws as f64;
    }
    (total, var.sqrt())
}

/// Nodes per dimension for the Monte Carlo comparison; ten nodes leave
/// errors of a few hundredths of a nat on the wider latent densities drawn
/// here.
const MC_CHECK_NODES: usize = 30;

#[test]
fn criterion_06_quadrature_against_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut within = 0;
    let mut worst = 0.0f64;
    for inst in 0..10u64 {
        let d = 1 + (inst as usize % 2);
        let g = rng.random_range(1..=3);
        let m = rng.random_range(3..=6);
        let model = random_model(&mut rng, g, d, m, 0.8);
        let data = sample(&model, 8, 6000 + inst);
        let lq = loglik_quadrature(&model, &data, MC_CHECK_NODES).unwrap();
        let (mc, se) = monte_carlo_loglik(&model, &data, 100_000, &mut rng);
        let z = (lq - mc).abs() / se;
        worst = worst.max(z);
        if z <= 3.0 {
            within += 1;
        }
    }
    let mut zero = random_model(&mut rng, 2, 2, 7, 1.0);
    zero.w.fill(0.0);
    let data = sample(&zero, 30, 66);
    let exact = (30 * 7) as f64 * 0.5f64.ln();
    let got = loglik_quadrature(&zero, &data, 10).unwrap();
    // exact up to the rounding of the closed form itself
    let zero_ok = (got - exact).abs() <= 4.0 * f64::EPSILON * exact.abs();
    let pass = within == 10 && zero_ok;
    report(
        6,
        pass,
        &format!("{within}/10 within 3 SE at {MC_CHECK_NODES} nodes (largest {worst:.2} SE); W=0 gives {got} vs {exact}"),
    );
    assert!(pass);
}

fn brute_ari(a: &[usize], b: &[usize]) -> Ratio<i128> {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0i128, 0i128, 0i128);
    for i in 0..n {
        for j in i + 1..n {
            let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
            both += i128::from(sa && sb);
            in_a += i128::from(sa);
            in_b += i128::from(sb);
        }
    }
    let pairs = (n * (n - 1) / 2) as i128;
    let expected = Ratio::new(in_a * in_b, pairs);
    let max = Ratio::new(in_a + in_b, 2);
    if max == expected {
        return Ratio::from_integer(i128::from(Ratio::from_integer(both) == expected));
    }
    (Ratio::from_integer(both) - expected) / (max - expected)
}

#[test]
fn criterion_07_ari_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut equal = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let ka = rng.random_range(1..=5);
        let kb = rng.random_range(1..=5);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        if adjusted_rand_index_exact(&a, &b).unwrap() == brute_ari(&a, &b) {
            equal += 1;
        }
    }
    report(7, equal == 100, &format!("{equal}/100 pairs exactly equal"));
    assert_eq!(equal, 100);
}

/// Negative structured criterion over an unconstrained parameterization of
/// one structure with d = 2, G = 2.
struct Brute<'a> {
    scatter: &'a ScatterSet<f64>,
    structure: CovarianceStructure,
}

impl Brute<'_> {
    fn dims(&self) -> usize {
        use CovarianceStructure::*;
        match self.structure {
            EII => 1,
            VII => 2,
            EEE | VEI => 3,
            VVI => 4,
            _ => unreachable!(),
        }
    }

    fn sigmas(&self, p: &[f64]) -> Vec<DMatrix<f64>> {
        use CovarianceStructure::*;
        let diag = |a: f64, b: f64| DMatrix::from_diagonal(&DVector::from_vec(vec![a.exp(), b.exp()]));
        match self.structure {
            EII => vec![diag(p[0], p[0]); 2],
            VII => vec![diag(p[0], p[0]), diag(p[1], p[1])],
            EEE => {
                let l = DMatrix::from_row_slice(2, 2, &[p[0].exp(), 0.0, p[1], p[2].exp()]);
                vec![&l * l.transpose(); 2]
            }
            VEI => vec![diag(p[0] + p[2], p[0] - p[2]), diag(p[1] + p[2], p[1] - p[2])],
            VVI => vec![diag(p[0], p[1]), diag(p[2], p[3])],
            _ => unreachable!(),
        }
    }
}

impl CostFunction for Brute<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok(structured_criterion(self.scatter, &self.sigmas(p)).map_or(f64::INFINITY, |c| -c))
    }
}

fn brute_optimum(scatter: &ScatterSet<f64>, structure: CovarianceStructure) -> f64 {
    let problem = Brute { scatter, structure };
    let k = problem.dims();
    let mut best = f64::INFINITY;
    let mut start = vec![0.0; k];
    for round in 0..4 {
        let step = if round == 0 { 1.0 } else { 0.05 };
        let mut simplex = vec![start.clone()];
        for i in 0..k {
            let mut v = start.clone();
            v[i] += step;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-13).unwrap();
        let problem = Brute { scatter, structure };
        let result = Executor::new(problem, solver)
            .configure(|s| s.max_iters(20_000))
            .run()
            .unwrap();
        let state = result.state();
        if state.get_best_cost() < best {
            best = state.get_best_cost();
            start = state.get_best_param().unwrap().clone();
        }
    }
    -best
}

#[test]
fn criterion_08_projection_optimality() {
    use CovarianceStructure::*;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for _ in 0..20 {
        let scatter: Vec<DMatrix<f64>> = (0..2)
            .map(|_| {
                let a = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
                &a * a.transpose() + DMatrix::identity(2, 2) * 0.1
            })
            .collect();
        let counts = vec![rng.random_range(5.0..50.0), rng.random_range(5.0..50.0)];
        let set = ScatterSet::new(scatter.clone(), counts).unwrap();
        for s in [EEE, EII, VII, VEI, VVI] {
            let projected = project_structure(&set, s).unwrap().sigma;
            let value = structured_criterion(&set, &projected).unwrap();
            worst = worst.max((value - brute_optimum(&set, s)).abs());
        }
        bitwise &= project_structure(&set, VVV).unwrap().sigma == scatter;
    }
    let pass = worst <= 1e-4 && bitwise;
    report(8, pass, &format!("largest gap to numeric optimum {worst:.2e}; VVV identity {bitwise}"));
    assert!(pass);
}

#[test]
fn criterion_09_block_degeneracy_and_benefit() {
    let options = FitOptions {
        starts: 10,
        ..FitOptions::default()
    };
    let frozen = BlockOptions {
        freeze_beta: true,
        pin_sigma2: Some(1e-6),
    };
    let mut agree = 0;
    let mut worst = 0.0f64;
    for r in 0..5u64 {
        let truth = reference_block_model(10, 900 + r);
        let data = generate(&SimulationSpec::blocked(truth.clone(), 10, 20, 900 + r)).unwrap().data;
        let config = truth.config();
        // a fixed iteration budget, so both fits stop at the same step
        let opts = FitOptions {
            starts: 3,
            seed: r,
            stopping: StoppingRule::ParameterStability,
            tolerance: 0.0,
            max_iterations: 300,
            ..options.clone()
        };
        let block = fit_block(&data, &config, &opts, &frozen).unwrap();
        let flat = fit(&data, &config.with_block_effect(false), &opts).unwrap();
        let gap = (block.loglik_variational - flat.loglik_variational).abs() / data.n_rows() as f64;
        worst = worst.max(gap);
        if gap <= 1e-6 {
            agree += 1;
        }
    }

    let mut wins = 0;
    for r in 0..20u64 {
        let truth = reference_block_model(20, 9000 + r);
        let data = generate(&SimulationSpec::blocked(truth.clone(), 20, 20, 9000 + r)).unwrap().data;
        let config = truth.config();
        let opts = FitOptions { seed: r, ..options.clone() };
        let block = fit_block(&data, &config, &opts, &BlockOptions::default()).unwrap();
        let flat = fit(&data, &config.with_block_effect(false), &opts).unwrap();
        let b = score_fit(&block, &data, 10).unwrap().bic;
        let f = score_fit(&flat, &data, 10).unwrap().bic;
        if b < f {
            wins += 1;
        }
    }
    let pass = agree == 5 && wins >= 16;
    report(
        9,
        pass,
        &format!("{agree}/5 degenerate fits agree (largest gap {worst:.2e}/obs); block BIC lower in {wins}/20"),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs the congressional voting data; set MCLT_VOTES_CSV"]
fn criterion_10_voting_data() {
    let Ok(path) = std::env::var("MCLT_VOTES_CSV") else {
        report(10, false, "skipped: MCLT_VOTES_CSV not set");
        return;
    };
    // expected layout: header row, first column party, remaining columns 0/1
    let mut reader = csv_lite(&path);
    let party: Vec<String> = reader.iter().map(|r| r[0].clone()).collect();
    let rows: Vec<Vec<u8>> = reader
        .drain(..)
        .map(|r| r[1..].iter().map(|c| u8::from(c == "1")).collect())
        .collect();
    let data = BinaryDataset::from_rows(&rows).unwrap();
    let spec = mclt::selection::GridSpec {
        groups: (1..=5).collect(),
        latent_dims: (1..=5).collect(),
        structures: CovarianceStructure::ALL.to_vec(),
        block_effect: false,
        gh_nodes: 10,
        fit: FitOptions::default(),
        block: BlockOptions::default(),
        parallel_rows: true,
    };
    let grid = mclt::selection::run_grid(&data, &spec, None).unwrap();
    let best = grid.best_fit().unwrap();
    let ari = mclt::adjusted_rand_index(&best.fit.projection.hard_label, &party).unwrap();
    let pass = (0.50..=0.75).contains(&ari);
    report(10, pass, &format!("best BIC {:.1}, ARI vs party {ari:.3}", best.score.bic));
}

fn csv_lite(path: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect()
}
