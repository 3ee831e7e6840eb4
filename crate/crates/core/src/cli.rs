//! The `glassopt` command line: oracle suites, probes, training runs and simulations.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage or
//! config errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use crate::alice::{glass_term, modified_hessian, naq_exactness_check, qn_scale};
use crate::glass::{self, Density, KernelSpec};
use crate::harness::{self, random_spd, ExperimentConfig, HarnessError};
use crate::oracles::{self, EstimatorKernel, SyntheticGlass1D, TestMatrix, UniformPreactivationNet};
use crate::report::{write_oracle_csv, OracleRow};
use crate::rng::{child_seed, seeded};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "glassopt", version, about = "Gradient-glass probes, oracle suites and the Alice optimizer")]
pub struct Cli {
    /// Output directory (created if missing).
    #[arg(long, global = true, env = "GLASSOPT_OUT")]
    pub out: Option<PathBuf>,
    /// Seed; for config-driven commands it replaces the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an oracle suite and write `verify_<suite>.csv`.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Run the power-law probe described by a config file.
    Probe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a multi-seed experiment described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a standalone simulation scenario.
    Simulate {
        #[command(subcommand)]
        scenario: Scenario,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Kernel,
    Glass,
    Naq,
    Step,
    Walk,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Scenario {
    /// Reflected random walk through equally spaced gradient kicks.
    GlassWalk {
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        rho: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Diagonal quasi-Newton steps on a random 10 x 100 least-squares problem.
    UnderdeterminedLs,
}

/// One named pass/fail check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Checks plus the oracle rows behind them.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    pub rows: Vec<OracleRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn extend(&mut self, other: SuiteReport) {
        self.checks.extend(other.checks);
        self.rows.extend(other.rows);
    }

    pub fn print_table(&self, title: &str) {
        println!("{title}");
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            println!("  {:<4} {:<width$}  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
}

/// Diagonal-estimator bias and variance on random dominant matrices, plus restricted updates.
pub fn suite_kernel(seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::default();
    let d = 50;
    for k in 0..3u64 {
        let m = match TestMatrix::random_dominant(d, child_seed(seed, k)) {
            Ok(m) => m,
            Err(e) => {
                rep.checks.push(Check::new(format!("matrix{k}"), false, e.to_string()));
                continue;
            }
        };
        let run = |density, kernel, n, s| oracles::mc_estimator(&m, density, kernel, None, n, child_seed(seed, 100 + 10 * k + s));
        let (rad, nrm) = match (
            run(Density::Rademacher, EstimatorKernel::Identity, 20_000, 0),
            run(Density::StandardNormal, EstimatorKernel::Optimal { restrict: 0.0 }, 20_000, 1),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                rep.checks.push(Check::new(format!("matrix{k}"), false, e.to_string()));
                continue;
            }
        };
        let (b, se) = rad.pooled_rel_bias.unwrap_or((f64::NAN, f64::NAN));
        rep.checks.push(Check::new(format!("matrix{k} rademacher bias"), b.abs() <= 3.0 * se, format!("{b:.2e} (3 SE = {:.2e})", 3.0 * se)));
        let (vr, vn) = (rad.total_variance(), nrm.total_variance());
        rep.checks.push(Check::new(format!("matrix{k} rademacher <= normal"), vr <= vn, format!("{vr:.4} vs {vn:.4}")));
        let rel = vr / rad.total_predicted_variance() - 1.0;
        rep.checks.push(Check::new(format!("matrix{k} closed-form variance"), rel.abs() < 0.05, format!("rel diff {rel:+.4}")));
        rep.rows.push(OracleRow::new(format!("matrix{k}_rademacher_variance"), vr, rad.total_predicted_variance(), 0.0, 20_000));
        rep.rows.push(OracleRow::new(format!("matrix{k}_normal_variance"), vn, nrm.total_predicted_variance(), 0.0, 20_000));
    }
    let p = glass::update_probability(Density::StandardNormal, 1.0);
    rep.checks.push(Check::new("restricted update probability", (p - 0.3173).abs() <= 0.002, format!("{p:.4}")));
    rep.rows.push(OracleRow::new("restricted_update_probability", p, 0.3173, 0.0, 1));
    match (KernelSpec::unrestricted(Density::StandardNormal, 1.0), KernelSpec::new(Density::StandardNormal, 1.0, 1.0)) {
        (Ok(u), Ok(r)) => {
            let (vu, vr) = (glass::estimator_variance(&u, 1.0), glass::estimator_variance(&r, 1.0));
            rep.checks.push(Check::new(
                "restricted effective variance below unrestricted",
                vr.effective < vu.effective,
                format!("{:.4} vs {:.4}", vr.effective, vu.effective),
            ));
            rep.rows.push(OracleRow::new("unrestricted_variance", vu.effective, f64::NAN, 0.0, 1));
            rep.rows.push(OracleRow::new("restricted_effective_variance", vr.effective, f64::NAN, 0.0, 1));
            rep.rows.push(OracleRow::new("restricted_inverse_c", 1.0 / r.c, 1.40, 0.0, 1));
        }
        (Err(e), _) | (_, Err(e)) => rep.checks.push(Check::new("kernel constants", false, e.to_string())),
    }
    rep
}

/// Gradient-variation bound on a network with uniform near-threshold pre-activations.
pub fn suite_glass(seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::default();
    let psi = 1.0;
    let net = match UniformPreactivationNet::new(8, 64, seed) {
        Ok(n) => n,
        Err(e) => {
            rep.checks.push(Check::new("network", false, e.to_string()));
            return rep;
        }
    };
    for (name, scale, expect_within) in [("small step", 1e-3, true), ("large step", 10.0, false)] {
        match oracles::mc_variation(&net, psi, scale, Some(net.first_layer.clone()), 10_000, child_seed(seed, 1)) {
            Ok(r) => {
                let f = r.fraction_glass();
                let ok = if expect_within { f >= 0.99 } else { f < 0.99 };
                rep.checks.push(Check::new(
                    format!("{name} coverage"),
                    ok,
                    format!("{:.4} of {} glass coordinates within bound, precondition violated {:.2}%", f, r.glass_coords, 100.0 * r.precondition_rate()),
                ));
                rep.rows.push(OracleRow::new(format!("coverage_{}", name.replace(' ', "_")), f, if expect_within { 1.0 } else { f64::NAN }, 0.0, r.n_samples as u64));
            }
            Err(e) => rep.checks.push(Check::new(name, false, e.to_string())),
        }
    }
    rep
}

/// NAQ exactness over a grid of dimensions and momenta, with a negative control.
pub fn suite_naq(seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::default();
    for (k, (d, beta1)) in [(5usize, 0.9f64), (20, 0.95), (50, 0.9), (50, 0.99)].into_iter().enumerate() {
        let mut rng = seeded(child_seed(seed, k as u64));
        let h = random_spd(d, &mut rng);
        let h_mod: Vec<f64> = (0..d).map(|i| h[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum()).collect();
        let g0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = naq_exactness_check(&h, &g0, &gamma, beta1, &h_mod, 50, None);
        let control = naq_exactness_check(&h, &g0, &gamma, beta1, &h_mod, 50, Some((0.5 * (1.0 - beta1), 1.0)));
        match (exact, control) {
            (Ok(e), Ok(c)) => {
                let (re, rc) = (e.max_relative_residual(), c.max_relative_residual());
                rep.checks.push(Check::new(format!("d={d} beta1={beta1} exact"), re < 1e-10 && !e.diverged, format!("max residual {re:.2e}")));
                rep.checks.push(Check::new(format!("d={d} beta1={beta1} control"), rc > 1e-3, format!("max residual {rc:.2e}")));
                rep.rows.push(OracleRow::new(format!("naq_d{d}_b{beta1}_residual"), re, 0.0, 0.0, 50));
                rep.rows.push(OracleRow::new(format!("naq_d{d}_b{beta1}_control_residual"), rc, f64::NAN, 0.0, 50));
            }
            (Err(e), _) | (_, Err(e)) => rep.checks.push(Check::new(format!("d={d}"), false, e.to_string())),
        }
    }
    rep
}

/// `−g/h̄` for one coordinate, built from the optimizer's own pieces.
pub fn modified_qn_step(g: f64, h: f64, rho: f64, eps: f64) -> f64 {
    let hg = glass_term(&[rho], &[g], eps);
    let hbar = modified_hessian(&hg, &[h], eps).expect("nonnegative inputs");
    -g.signum() * qn_scale(&[g], &hbar)[0]
}

/// Modified quasi-Newton step against direct minimization of the per-coordinate model.
pub fn suite_step(seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::default();
    let eps = 1e-8;
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let n = 1000;
    for _ in 0..n {
        let g = 10f64.powf(rng.random_range(-2.0..1.0)) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let h = 10f64.powf(rng.random_range(-2.0..1.0));
        let rho = 10f64.powf(rng.random_range(-2.0..1.0));
        let step = modified_qn_step(g, h, rho, eps);
        let truth = oracles::brute_force_step(g, h, rho);
        worst = worst.max(((step - truth) / truth).abs());
    }
    rep.checks.push(Check::new("golden-section agreement", worst < 1e-6, format!("max relative error {worst:.2e} over {n} points")));
    rep.rows.push(OracleRow::new("step_max_relative_error", worst, 0.0, 0.0, n));

    let mut exact = true;
    for _ in 0..100 {
        let g: f64 = rng.random_range(-5.0..5.0);
        let v: f64 = rng.random_range(0.1..5.0);
        exact &= modified_qn_step(g, v, 0.0, eps) == -g.signum() * (g.abs() / (v + eps));
        let hg = glass_term(&[v], &[g], eps)[0];
        exact &= modified_qn_step(g, 0.0, v, eps) == -g.signum() * (g.abs() / (2.0 * hg + eps));
    }
    rep.checks.push(Check::new("degenerate rows collapse exactly", exact, "rho=0 and h=0"));
    rep
}

/// Reflected glass walk against its closed-form mean and variance.
pub fn suite_walk(seed: u64, rho: f64, lambda: f64, n: usize, trials: usize) -> Result<SuiteReport, oracles::OracleError> {
    let mut rep = SuiteReport::default();
    let r = oracles::glass_walk_expectation(&SyntheticGlass1D::new(rho, lambda, n, trials, seed))?;
    let (ra, rv) = (r.mean_abs / r.predicted_abs, r.variance / r.predicted_variance);
    if rho > 0.0 {
        rep.checks.push(Check::new("mean |delta| ratio", (0.98..=1.02).contains(&ra), format!("{ra:.4}")));
        rep.checks.push(Check::new("variance ratio", (0.98..=1.02).contains(&rv), format!("{rv:.4}")));
    } else {
        rep.checks.push(Check::new("zero density", r.mean_abs == 0.0, format!("{}", r.mean_abs)));
    }
    rep.rows.extend(r.rows());
    Ok(rep)
}

fn out_dir(cli_out: &Option<PathBuf>, cfg_out: Option<&Path>) -> PathBuf {
    cli_out.clone().or_else(|| cfg_out.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("glassopt-out"))
}

fn write_rows(dir: &Path, name: &str, rows: &[OracleRow]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    write_oracle_csv(&path, rows).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, i32> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn finish(rep: &SuiteReport, title: &str, dir: &Path, file: &str) -> i32 {
    rep.print_table(title);
    if let Err(e) = write_rows(dir, file, &rep.rows) {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    if rep.passed() {
        EXIT_OK
    } else {
        EXIT_FAIL
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Verify { suite } => {
            let dir = out_dir(&cli.out, None);
            let mut rep = SuiteReport::default();
            let all = *suite == Suite::All;
            if all || *suite == Suite::Kernel {
                rep.extend(suite_kernel(seed));
            }
            if all || *suite == Suite::Glass {
                rep.extend(suite_glass(seed));
            }
            if all || *suite == Suite::Naq {
                rep.extend(suite_naq(seed));
            }
            if all || *suite == Suite::Step {
                rep.extend(suite_step(seed));
            }
            if all || *suite == Suite::Walk {
                match suite_walk(seed, 1.0, 1.0, 1000, 100_000) {
                    Ok(r) => rep.extend(r),
                    Err(e) => rep.checks.push(Check::new("walk", false, e.to_string())),
                }
            }
            let name = format!("{suite:?}").to_lowercase();
            finish(&rep, &format!("verify {name}"), &dir, &format!("verify_{name}.csv"))
        }
        Command::Probe { config } => {
            let cfg = match load_config(config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let dir = out_dir(&cli.out, cfg.output_dir.as_deref());
            if let Err(e) = fs::create_dir_all(&dir) {
                eprintln!("error: {}: {e}", dir.display());
                return EXIT_USAGE;
            }
            let mut code = EXIT_OK;
            for &s in &cfg.seeds {
                match harness::run_probe(&cfg, s) {
                    Ok(report) => {
                        let path = dir.join(format!("powerlaw_seed{s}.csv"));
                        if let Err(e) = report.write_csv(&path) {
                            eprintln!("error: {}: {e}", path.display());
                            return EXIT_USAGE;
                        }
                        println!("seed {s} (lambda = {})", report.lambda);
                        for row in &report.rows {
                            match row.p {
                                Some(p) => println!("  {:<10} p = {p:.4}", row.partition),
                                None => println!("  {:<10} p undefined (zero variation)", row.partition),
                            }
                        }
                    }
                    Err(e) => {
                        eprintln!("seed {s}: {e}");
                        code = EXIT_FAIL;
                    }
                }
            }
            code
        }
        Command::Train { config } => {
            let cfg = match load_config(config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let dir = out_dir(&cli.out, cfg.output_dir.as_deref());
            match harness::run_experiment(&cfg, &dir) {
                Ok(summary) => {
                    for r in &summary.per_seed {
                        match &r.error {
                            None => println!("seed {:<6} final {:.6e}  gradient evaluations {}", r.seed, r.final_metric, r.grad_evals),
                            Some(e) => println!("seed {:<6} failed: {e}", r.seed),
                        }
                    }
                    println!("min {:.6e}  median {:.6e}  max {:.6e}", summary.min, summary.median, summary.max);
                    if summary.per_seed.iter().any(|r| r.error.is_some()) {
                        EXIT_FAIL
                    } else {
                        EXIT_OK
                    }
                }
                Err(e @ (HarnessError::Config(_) | HarnessError::Parse(_) | HarnessError::Io { .. })) => {
                    eprintln!("error: {e}");
                    EXIT_USAGE
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_FAIL
                }
            }
        }
        Command::Simulate { scenario } => {
            let dir = out_dir(&cli.out, None);
            match scenario {
                Scenario::GlassWalk { rho, lambda, n, trials } => match suite_walk(seed, *rho, *lambda, *n, *trials) {
                    Ok(rep) => finish(&rep, "glass walk", &dir, "glass_walk.csv"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_USAGE
                    }
                },
                Scenario::UnderdeterminedLs => match oracles::underdetermined_ls(seed) {
                    Ok(r) => {
                        let rep = SuiteReport {
                            checks: vec![
                                Check::new("full step raises loss", r.loss_full_step > r.loss_initial, format!("{:.4} -> {:.4}", r.loss_initial, r.loss_full_step)),
                                Check::new("damped step lowers loss", r.loss_damped_step < r.loss_initial, format!("{:.4} -> {:.4}", r.loss_initial, r.loss_damped_step)),
                                Check::new("norms", true, format!("full step {:.4}, minimum-norm solution {:.4}", r.norm_full_step, r.norm_min_solution)),
                            ],
                            rows: r.rows(),
                        };
                        finish(&rep, "underdetermined least squares", &dir, "underdetermined_ls.csv")
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_USAGE
                    }
                },
            }
        }
    }
}
