use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dsgd_core::dataset::SplitSpec;
use dsgd_core::genfun::CheckStatus;
use dsgd_core::harness::{self, ExperimentConfig, Format, Mode, ProblemSource};

#[derive(Parser)]
#[command(name = "dsgd", version, about = "Delayed SGD stability and generalization lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a LIBSVM file and check the serialize/parse round trip.
    Parse {
        input: PathBuf,
        /// Force the feature dimension instead of inferring it.
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generalization error versus delay.
    Sweep(Common),
    /// Empirical average stability from coupled runs, compared with the bounds.
    Stability {
        #[command(flatten)]
        common: Common,
        /// Number of replaced training indices.
        #[arg(long)]
        replacements: Option<usize>,
    },
    /// Check the coefficient bounds over a grid of delays and step sizes.
    VerifyLemma {
        #[command(flatten)]
        common: Common,
        /// Step sizes as multiples of 1/(20 mu (tau+1)).
        #[arg(long, value_delimiter = ',')]
        eta_fractions: Option<Vec<f64>>,
        /// Also write a coefficient table per grid point.
        #[arg(long)]
        dump_tables: bool,
    },
    /// Evaluate the closed-form bounds as JSON.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        w0_norm: Option<f64>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated delays (the tau grid for verify-lemma).
    #[arg(long, value_delimiter = ',')]
    delays: Option<Vec<usize>>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<OutFormat>,
    /// Use bounded random delays with the given delays as bounds.
    #[arg(long)]
    random: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl Common {
    fn load(&self, mode: Mode) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.mode = mode;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(d) = &self.delays {
            if mode == Mode::VerifyLemma {
                cfg.lemma.taus = d.clone();
            } else {
                cfg.delays = d.clone();
            }
        }
        if self.eta.is_some() {
            cfg.eta = self.eta;
        }
        if let Some(t) = self.iters {
            cfg.iters = t;
        }
        if let Some(f) = self.format {
            cfg.format = match f {
                OutFormat::Csv => Format::Csv,
                OutFormat::Json => Format::Json,
            };
        }
        if self.random {
            cfg.random_delays = true;
        }
        Ok(cfg)
    }
}

fn report_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Parse { input, dim, common } => {
            let mut cfg = common.load(Mode::ParseCheck)?;
            cfg.source = Some(ProblemSource::Libsvm { path: input, dim, split: SplitSpec::default() });
            let s = harness::parse_check(&cfg)?;
            println!("{}: n={} d={} nnz={} round_trip={}", s.dataset, s.n, s.d, s.nnz, s.round_trip);
            report_paths(&harness::emit_parse_check(&s, &common.out, cfg.format)?);
            if !s.round_trip {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep(common) => {
            let cfg = common.load(Mode::GenSweep)?;
            let res = harness::run_gen_sweep(&cfg)?;
            println!("config {} eta={}", res.config_digest, res.eta);
            for s in &res.summary {
                println!(
                    "delay {:>3}: final gen error {:.6e} +- {:.2e} ({} seeds, {} diverged)",
                    s.delay,
                    s.final_gen_mean,
                    s.final_gen_std,
                    s.seeds_ok,
                    s.diverged.len()
                );
            }
            report_paths(&harness::emit_sweep(&res, &common.out, cfg.format)?);
        }
        Command::Stability { common, replacements } => {
            let mut cfg = common.load(Mode::Stability)?;
            if let Some(k) = replacements {
                cfg.stability.replacements = k;
            }
            let res = harness::estimate_avg_stability(&cfg)?;
            println!("config {}", res.config_digest);
            for e in &res.estimates {
                println!(
                    "delay {:>3}: stability {:.4e} (se {:.2e}, signed {:+.3e}) prop1 {:.4e} {} {:.4e}",
                    e.delay, e.estimate, e.std_err, e.signed_mean, e.prop1.total, e.thm.bound, e.thm.total
                );
            }
            report_paths(&harness::emit_stability(&res, &common.out, cfg.format)?);
        }
        Command::VerifyLemma { common, eta_fractions, dump_tables } => {
            let mut cfg = common.load(Mode::VerifyLemma)?;
            if let Some(f) = eta_fractions {
                cfg.lemma.eta_fractions = f;
            }
            cfg.lemma.dump_tables |= dump_tables;
            let rep = harness::verify_lemma_grid(&cfg)?;
            for r in rep.rows.iter().filter(|r| r.status == CheckStatus::Fail) {
                println!("FAIL tau={} eta={} worst margin {:.3e}", r.tau, r.eta, r.worst_margin);
            }
            println!(
                "{} grid points: {} failed, {} not applicable",
                rep.rows.len(),
                rep.failures,
                rep.not_applicable
            );
            report_paths(&harness::emit_lemma(&rep, &common.out, cfg.format)?);
            if rep.failures > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bounds { common, n, mu, lambda, r, sigma, rho, w0_norm } => {
            let mut cfg = common.load(Mode::Bounds)?;
            let o = &mut cfg.bounds;
            o.n = n.or(o.n);
            o.mu = mu.or(o.mu);
            o.lambda = lambda.or(o.lambda);
            o.r = r.or(o.r);
            o.sigma = sigma.or(o.sigma);
            o.rho = rho.or(o.rho);
            o.w0_norm = w0_norm.or(o.w0_norm);
            let reports = harness::bound_reports(&cfg)?;
            if reports.is_empty() {
                bail!("no bound reports produced");
            }
            for rep in &reports {
                println!("tau {:>3} {:<26} {:.6e} {:?}", rep.inputs.tau, rep.bound, rep.total, rep.flags);
            }
            report_paths(&harness::emit_bounds(&reports, &cfg.digest(), &common.out)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
